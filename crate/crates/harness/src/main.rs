use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MISR_LOG", "info")).init();
    let cli = misr::cli::Cli::parse();
    if let Err(e) = misr::cli::run(cli) {
        log::error!("{e}");
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
