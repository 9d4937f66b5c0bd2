use clap::Parser;

use dyvo::cli::{run_command, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = cli.resolved()?;
    run_command(cli.command, &cfg)?;
    Ok(())
}
