use clap::Parser;

fn main() -> anyhow::Result<()> {
    bilevel_cli::commands::run(bilevel_cli::commands::Cli::parse())
}
