//! On-disk store for tabulated `g` curves, keyed by frame, covariance and
//! build options.

use std::path::{Path, PathBuf};

use mtldyn_core::gmatrix::{cache_key, GCache, GCacheOptions, GCACHE_VERSION};
use mtldyn_core::Matrix;

use crate::Result;

pub const CACHE_ENV: &str = "MTLDYN_CACHE_DIR";

/// Cache directory from the environment, if set and non-empty.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("gcache-{key}.json"))
}

fn read_cached(path: &Path, key: &str) -> Option<GCache> {
    let text = std::fs::read_to_string(path).ok()?;
    let cache: GCache = serde_json::from_str(&text).ok()?;
    (cache.version == GCACHE_VERSION && cache.key == key).then_some(cache)
}

/// Load a matching cache from `dir`, or build one and store it there.
/// Stale or unreadable files are rebuilt.
pub fn load_or_build_in(dir: Option<&Path>, u: &[f64], v: &[f64], c_x: &Matrix, opts: &GCacheOptions) -> Result<GCache> {
    let key = cache_key(u, v, c_x, opts);
    if let Some(dir) = dir {
        let path = cache_path(dir, &key);
        if let Some(c) = read_cached(&path, &key) {
            return Ok(c);
        }
        let built = GCache::build(u, v, c_x, opts)?;
        std::fs::create_dir_all(dir)?;
        let tmp = path.with_extension(format!("json.tmp{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec(&built)?)?;
        std::fs::rename(&tmp, &path)?;
        return Ok(built);
    }
    Ok(GCache::build(u, v, c_x, opts)?)
}

pub fn load_or_build(u: &[f64], v: &[f64], c_x: &Matrix, opts: &GCacheOptions) -> Result<GCache> {
    load_or_build_in(cache_dir().as_deref(), u, v, c_x, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_load_reads_file() {
        let dir = tempfile::tempdir().unwrap();
        let c_x = Matrix::identity(3, 3);
        let u = [0.5f64.sqrt(), -0.5f64.sqrt()];
        let v = [1.0, 0.0, 0.0];
        let opts = GCacheOptions { s_max: 2.0, n_samples: 2000, max_refine: 0, ..Default::default() };
        let a = load_or_build_in(Some(dir.path()), &u, &v, &c_x, &opts).unwrap();
        let path = cache_path(dir.path(), &a.key);
        assert!(path.exists());
        let b = load_or_build_in(Some(dir.path()), &u, &v, &c_x, &opts).unwrap();
        assert_eq!(a, b);

        std::fs::write(&path, "{ not json").unwrap();
        let c = load_or_build_in(Some(dir.path()), &u, &v, &c_x, &opts).unwrap();
        assert_eq!(a, c);
    }
}
