use std::process::ExitCode;

fn main() -> ExitCode {
    scenesynth::cli::main_entry()
}
