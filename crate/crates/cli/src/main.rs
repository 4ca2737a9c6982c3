fn main() {
    std::process::exit(vpr_rerank_cli::run(std::env::args_os()));
}
