fn main() {
    std::process::exit(ftdr::harness::cli::run(std::env::args_os(), &mut std::io::stdout()));
}
