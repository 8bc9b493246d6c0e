use clap::Parser;

fn main() {
    let cli = kvcat::cli::Cli::parse();
    if let Err(e) = kvcat::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
