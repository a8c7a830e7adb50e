use clap::Parser;

use dipstack_cli::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = run(&cli.command);
    if let Err(e) = &result {
        eprintln!("dipstack {}: {e}", cli.command.name());
    }
    std::process::exit(exit_code(&result));
}
