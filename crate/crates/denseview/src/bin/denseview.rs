fn main() {
    // Subcommands arrive once the pipeline modules land.
    eprintln!("denseview: not yet wired");
    std::process::exit(2);
}
