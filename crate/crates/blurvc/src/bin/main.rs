fn main() {
    std::process::exit(blurvc::cli::main_entry(std::env::args_os()));
}
