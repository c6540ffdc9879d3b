fn main() -> std::process::ExitCode {
    caravan_gateway::cli::main()
}
