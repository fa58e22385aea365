use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = panseg_cli::Cli::parse();
    match panseg_cli::run(&cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("{}", e.render());
            std::process::exit(e.exit_code());
        }
    }
}
