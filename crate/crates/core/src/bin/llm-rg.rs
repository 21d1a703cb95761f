fn main() {
    std::process::exit(llm_rg::cli::run());
}
