fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWGAN_LOG", "info")).init();
    std::process::exit(flowgan_cli::run(std::env::args_os()));
}
