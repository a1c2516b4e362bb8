fn main() {
    env_logger::init();
    std::process::exit(crossalign::cli::main_entry());
}
