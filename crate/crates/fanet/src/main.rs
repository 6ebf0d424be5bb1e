fn main() {
    std::process::exit(fanet::run());
}
