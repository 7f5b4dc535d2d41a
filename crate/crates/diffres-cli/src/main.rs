use clap::Parser;

fn main() {
    let cli = diffres_cli::Cli::parse();
    match diffres_cli::run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
