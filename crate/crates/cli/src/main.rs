fn main() {
    std::process::exit(latent_routing_cli::run(std::env::args_os()));
}
