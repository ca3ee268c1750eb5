fn main() {
    sendvae::init_threads();
    std::process::exit(sendvae::cli_main());
}
