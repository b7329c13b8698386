fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let code = cfg_guidance::cli::run(std::env::args().collect(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
