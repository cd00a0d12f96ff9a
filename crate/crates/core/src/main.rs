fn main() {
    std::process::exit(dpmix::run_cli());
}
