use clap::Parser;

fn main() {
    let cli = mvtt::cli::Cli::parse();
    if let Err(e) = mvtt::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
