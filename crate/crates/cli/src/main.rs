use clap::Parser;

fn main() {
    let cli = logconcave_cli::Cli::parse();
    if let Err(e) = logconcave_cli::run(cli) {
        eprintln!("lcd: {e}");
        std::process::exit(e.exit_code());
    }
}
