// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(neuraxis_cli::run_command(std::env::args_os()));
}
