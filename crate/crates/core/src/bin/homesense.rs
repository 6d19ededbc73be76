fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed = std::env::var(homesense::cli::SEED_ENV).ok();
    let code = homesense::cli::run_cli(std::env::args_os(), seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
