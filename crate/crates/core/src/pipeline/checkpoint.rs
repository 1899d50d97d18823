//! Parameter checkpoints in the tensor container format.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;

const PARAM_PREFIX: &str = "param/";

/// Write the parameters selected by `keep`, tagged with the stage name and
/// its config fingerprint. Parameter order is the store's sorted order, so
/// equal weights give equal bytes.
pub fn save(path: &Path, stage: &str, stage_hash: &str, store: &ParamStore, keep: impl Fn(&str) -> bool) -> Result<()> {
    let mut c = Container::new();
    c.put_str("stage", stage);
    c.put_str("stage_hash", stage_hash);
    for (name, t) in store.iter().filter(|(n, _)| keep(n)) {
        c.put_f64(&format!("{PARAM_PREFIX}{name}"), t.clone());
    }
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    c.write(path)
}

/// Load a checkpoint written by [`save`] for `stage`.
pub fn load(path: &Path, stage: &str) -> Result<ParamStore> {
    let c = Container::read(path)?;
    let found = c.str("stage")?;
    if found != stage {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("checkpoint of stage `{found}`, expected `{stage}`"),
        });
    }
    let mut store = ParamStore::new();
    for name in c.names() {
        if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
            store.insert(p, c.f64(name)?.clone());
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn round_trip_with_filter() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("enc.a", Tensor::new(&[2], vec![1.0, -2.5]).unwrap());
        s.insert("mbm.b", Tensor::ones(&[3]));
        let p = dir.path().join("x/c.nct");
        save(&p, "pretrain", "h", &s, |n| n.starts_with("enc.")).unwrap();
        let back = load(&p, "pretrain").unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.get("enc.a").unwrap(), s.get("enc.a").unwrap());
        assert!(load(&p, "cotrain").is_err());
    }
}
