//! Image reference resolution. Bytes are passed through untouched.

use std::path::{Path, PathBuf};

/// Resolves an image reference (file path or URL) to raw bytes.
pub trait ImageLoader: Send + Sync {
    fn load(&self, image_ref: &str) -> std::io::Result<Vec<u8>>;
}

impl<F> ImageLoader for F
where
    F: Fn(&str) -> std::io::Result<Vec<u8>> + Send + Sync,
{
    fn load(&self, image_ref: &str) -> std::io::Result<Vec<u8>> {
        self(image_ref)
    }
}

pub fn is_url(image_ref: &str) -> bool {
    image_ref.starts_with("http://") || image_ref.starts_with("https://")
}

/// Reads relative paths against `root`; fetches `http(s)://` references.
#[derive(Debug, Clone, Default)]
pub struct FsImageLoader {
    root: PathBuf,
}

impl FsImageLoader {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

impl ImageLoader for FsImageLoader {
    fn load(&self, image_ref: &str) -> std::io::Result<Vec<u8>> {
        if is_url(image_ref) {
            let resp = reqwest::blocking::get(image_ref)
                .and_then(|r| r.error_for_status())
                .map_err(std::io::Error::other)?;
            return resp
                .bytes()
                .map(|b| b.to_vec())
                .map_err(std::io::Error::other);
        }
        std::fs::read(self.resolve(image_ref))
    }
}
