fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GVSE_LOG", "warn")).init();
    std::process::exit(gvse_cli::run(std::env::args_os()));
}
