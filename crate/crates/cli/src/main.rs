use clap::Parser;

fn main() {
    let cli = distilkit::args::Cli::parse();
    if let Err(err) = distilkit::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(distilkit::exit_code(&err));
    }
}
