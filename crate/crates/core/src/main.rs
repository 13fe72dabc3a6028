use clap::Parser;

fn main() {
    let cli = flab::cli::Cli::parse();
    if let Err(e) = flab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
