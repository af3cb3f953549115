use clap::Parser;

fn main() {
    let cli = fsim::cli::Cli::parse();
    std::process::exit(fsim::cli::exit_code(fsim::cli::run(&cli)));
}
