fn main() {
    dynasplat::cli::init_logging();
    std::process::exit(dynasplat::cli::run(std::env::args_os()));
}
