use clap::Parser;

fn main() {
    let cli = prgnn::cli::Cli::parse();
    match prgnn::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
