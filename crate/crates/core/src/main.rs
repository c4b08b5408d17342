fn main() {
    std::process::exit(dal_core::cli::run(std::env::args_os()));
}
