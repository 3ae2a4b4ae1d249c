use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("VOLLEY_LOG")).init();
    let cli = volley::cli::Cli::parse();
    std::process::exit(volley::cli::main_with(cli));
}
