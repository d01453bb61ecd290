use clap::Parser;

fn main() -> anyhow::Result<()> {
    glocal::cli::run(glocal::cli::Cli::parse())
}
