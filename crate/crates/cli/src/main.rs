use clap::Parser;

fn main() {
    let cli = mivae_cli::Cli::parse();
    match mivae_cli::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
