fn main() {
    std::process::exit(convoher2::cli::run(std::env::args_os()));
}
