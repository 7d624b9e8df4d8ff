// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(sae_toolkit::cli::run());
}
