fn main() {
    std::process::exit(opioid_lab::cli::run(std::env::args_os()));
}
