use std::path::Path;
use std::process::Command;

fn header() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/crpcl.h");
    std::fs::read_to_string(path).expect("build script writes the header")
}

#[test]
fn header_declares_every_export() {
    let h = header();
    assert!(h.starts_with("#ifndef CRPCL_H"));
    for symbol in [
        "crpcl_last_error_message",
        "crpcl_version",
        "crpcl_string_free",
        "crpcl_engine_new",
        "crpcl_engine_free",
        "crpcl_engine_assign",
        "crpcl_engine_discovered_k",
        "crpcl_engine_labels",
        "crpcl_engine_to_json",
        "crpcl_engine_from_json",
        "crpcl_dice_score",
        "crpcl_forgetting_rate",
        "crpcl_chernoff_bound",
        "crpcl_train_synthetic",
        "typedef struct CrpclEngine CrpclEngine;",
        "CRPCL_STATUS_OK = 0",
        "CRPCL_STATUS_PANIC = 7",
    ] {
        assert!(h.contains(symbol), "missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile_dir();
    let src = dir.join("use_header.c");
    std::fs::write(
        &src,
        "#include \"crpcl.h\"\nint main(void) { CrpclEngine *e = 0; \
         return crpcl_engine_new(1.0, 0.05, 1e-6, &e) == CRPCL_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status();
    match status {
        Ok(s) => {
            let _ = std::fs::remove_dir_all(&dir);
            assert!(s.success(), "header does not compile")
        }
        Err(_) => eprintln!("no C compiler on PATH; skipping compile check"),
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("crpcl-header-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
