use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("cbindgen.toml");
    match cbindgen::generate_with_config(&dir, config) {
        Ok(bindings) => {
            bindings.write_to_file(dir.join("include/ecgi.h"));
        }
        // Keep building with the committed header when parsing fails (e.g. on
        // a toolchain cbindgen does not understand yet).
        Err(e) => println!("cargo:warning=cbindgen skipped: {e}"),
    }
}
