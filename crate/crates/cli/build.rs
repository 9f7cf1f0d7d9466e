use std::process::Command;

fn main() {
    let rev = Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("g{}", s.trim()))
        .unwrap_or_else(|| "unknown".into());
    println!("cargo:rustc-env=CHIMERA_GIT_REV={rev}");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
