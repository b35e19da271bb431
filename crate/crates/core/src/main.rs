fn main() {
    std::process::exit(dcshield::cli::run(std::env::args_os()));
}
