//! `export_lp` output is compared byte for byte against reviewed files in
//! `tests/golden/`. Regenerate with `UPDATE_GOLDEN=1 cargo test --test golden`
//! and review the diff.

use std::path::Path;

mod common;

use common::{diamond, single_op};
use memsched::ilp::{build_model, export_lp};

fn check(name: &str, text: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(want == text.as_bytes(), "{name} differs from its golden file");
}

#[test]
fn single_op_lp() {
    check("single_op.lp", &export_lp(&build_model(&single_op(), false)));
}

#[test]
fn diamond_lp() {
    check("diamond.lp", &export_lp(&build_model(&diamond(), false)));
}

#[test]
fn diamond_pruned_lp() {
    check("diamond_pruned.lp", &export_lp(&build_model(&diamond(), true)));
}

#[test]
fn export_is_deterministic() {
    let g = diamond();
    let a = export_lp(&build_model(&g, true));
    let b = export_lp(&build_model(&g.clone(), true));
    assert_eq!(a, b);
    assert!(!a.contains('\r'));
    assert!(a.ends_with("End\n"));
}
