fn main() {
    std::process::exit(robust_diffusion_cli::run(std::env::args_os()));
}
