fn main() {
    std::process::exit(fqc_service::cli::run(std::env::args_os()));
}
