use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

/// The session directory's regular files as `<name>/<file>` entries of a
/// gzipped tarball, in sorted order.
pub fn tar_gz(dir: &Path, name: &str) -> std::io::Result<Vec<u8>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.path())
        .collect();
    files.sort();
    let mut tar = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
    for f in files {
        let file_name = f.file_name().expect("read_dir entries have names");
        tar.append_path_with_name(&f, Path::new(name).join(file_name))?;
    }
    tar.into_inner()?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.csv"), "x\n1\n").unwrap();
        std::fs::write(dir.path().join("a.json"), "{}").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        let bytes = tar_gz(dir.path(), "s1").unwrap();
        let mut ar = tar::Archive::new(flate2::read::GzDecoder::new(&bytes[..]));
        let mut seen = Vec::new();
        for e in ar.entries().unwrap() {
            let mut e = e.unwrap();
            let mut text = String::new();
            e.read_to_string(&mut text).unwrap();
            seen.push((e.path().unwrap().display().to_string(), text));
        }
        assert_eq!(seen, vec![("s1/a.json".into(), "{}".into()), ("s1/b.csv".into(), "x\n1\n".into())]);
    }
}
