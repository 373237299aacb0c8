fn main() -> std::process::ExitCode {
    evolab::cli::main_entry()
}
