use clap::Parser;

fn main() {
    let cli = redreg_cli::Cli::parse();
    std::process::exit(redreg_cli::run(cli));
}
