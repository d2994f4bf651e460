fn main() {
    std::process::exit(milx::cli::main_with(std::env::args_os()));
}
