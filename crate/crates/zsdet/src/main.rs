use clap::Parser;

fn main() {
    let cli = zsdet::cli::Cli::parse();
    if let Err(e) = zsdet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
