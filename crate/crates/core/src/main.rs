fn main() {
    std::process::exit(avd_core::cli::run(std::env::args_os()));
}
