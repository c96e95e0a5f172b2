use clap::Parser;

fn main() {
    let cli = nae::cli::Cli::parse();
    match nae::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(nae::cli::exit_code(&e));
        }
    }
}
