fn main() {
    env_logger::init();
    std::process::exit(a2w::cli::main_with_args(std::env::args_os()));
}
