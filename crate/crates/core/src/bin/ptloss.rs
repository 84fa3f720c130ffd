fn main() {
    std::process::exit(ptloss::cli::main_from_args());
}
