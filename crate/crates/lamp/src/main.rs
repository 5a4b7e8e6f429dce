fn main() {
    std::process::exit(lamp::harness::cli_main());
}
