use std::process::Command;

fn main() {
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
    let out = Command::new("git").args(["describe", "--tags", "--always", "--dirty"]).output();
    if let Ok(o) = out {
        if o.status.success() {
            let d = String::from_utf8_lossy(&o.stdout).trim().to_string();
            if !d.is_empty() {
                println!("cargo:rustc-env=WALKHAMMER_DESCRIBE=v{}-{d}", env!("CARGO_PKG_VERSION"));
            }
        }
    }
}
