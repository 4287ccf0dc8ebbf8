fn main() {
    std::process::exit(umc_core::cli::main_with_args(std::env::args_os()));
}
