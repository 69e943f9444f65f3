use std::env;
use std::fs;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    let mut header = Vec::new();
    cbindgen::Builder::new()
        .with_crate(&dir)
        .with_config(config)
        .generate()
        .expect("header generation")
        .write(&mut header);
    let out = dir.join("include").join("subband_shake.h");
    // Only touch the checked-in header when it actually changes.
    if fs::read(&out).ok().as_deref() != Some(&header[..]) {
        fs::create_dir_all(out.parent().unwrap()).unwrap();
        fs::write(&out, &header).unwrap();
    }
}
