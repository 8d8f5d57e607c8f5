fn main() {
    let env = env_logger::Env::new().filter_or("DSM_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
    std::process::exit(dsm::cli::run_command(std::env::args_os()));
}
