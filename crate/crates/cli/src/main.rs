use clap::Parser;
use ehrgen::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = ehrgen::run(&cli) {
        eprintln!("ehrgen {}: {e}", cli.command.name());
        std::process::exit(e.exit_code());
    }
}
