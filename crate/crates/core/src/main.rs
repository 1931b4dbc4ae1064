fn main() {
    std::process::exit(fedco::harness::main_with_args(std::env::args_os()));
}
