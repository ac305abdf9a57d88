fn main() {
    std::process::exit(taskgrasp::cli::main_exit_code());
}
