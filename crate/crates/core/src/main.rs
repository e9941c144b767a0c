fn main() {
    std::process::exit(keytrace::cli::run(std::env::args_os()));
}
