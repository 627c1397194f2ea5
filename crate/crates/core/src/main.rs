fn main() {
    std::process::exit(scenet::cli::main_from(std::env::args_os()));
}
