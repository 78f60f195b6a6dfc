fn main() {
    std::process::exit(perturb_core::cli::run(std::env::args_os()));
}
