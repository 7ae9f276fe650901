fn main() {
    std::process::exit(pic::cli::main_with(std::env::args_os()));
}
