fn main() {
    std::process::exit(pktlab::cli::main_with_args(std::env::args_os()));
}
