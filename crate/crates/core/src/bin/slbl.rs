fn main() {
    std::process::exit(softlabel::cli::run(std::env::args_os()));
}
