fn main() {
    std::process::exit(otdistill::cli::main_exit());
}
