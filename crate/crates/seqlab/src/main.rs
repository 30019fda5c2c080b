fn main() {
    std::process::exit(seqlab::run_cli());
}
