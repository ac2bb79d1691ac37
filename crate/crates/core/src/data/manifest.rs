use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::lda::HerbVocabulary;
use crate::tensor::Tensor;

/// One manifest line: `id<TAB>image path<TAB>herb|herb|...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub herbs: Vec<String>,
}

/// Parses a manifest. Relative image paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, img, herbs] = fields.as_slice() else {
            return Err(Error::BadFormat(format!(
                "{}:{}: expected 3 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        };
        let id = id.trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Sample { id, reason: "duplicate id".into() });
        }
        let herbs: Vec<String> = herbs.split('|').map(|h| h.trim().to_string()).filter(|h| !h.is_empty()).collect();
        if herbs.is_empty() {
            return Err(Error::Sample { id, reason: "empty herb list".into() });
        }
        out.push(ManifestRecord { id, path: base.join(img.trim()), herbs });
    }
    Ok(out)
}

/// Writes records with paths relative to `base` where possible.
pub fn write_manifest(records: &[ManifestRecord], base: &Path, mut out: impl Write) -> Result<()> {
    for r in records {
        let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
        writeln!(out, "{}\t{}\t{}", r.id, rel.display(), r.herbs.join("|"))?;
    }
    Ok(())
}

/// Box-filter resampling of an interleaved RGB8 buffer; each target pixel is
/// the coverage-weighted mean of the source pixels under it.
pub fn area_resize(rgb: &[u8], (sh, sw): (usize, usize), (th, tw): (usize, usize)) -> Vec<f64> {
    let spans = |src: usize, dst: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|t| {
                let (lo, hi) = (t as f64 * scale, (t + 1) as f64 * scale);
                let mut parts = Vec::new();
                let mut s = lo.floor() as usize;
                while (s as f64) < hi && s < src {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    if w > 0.0 {
                        parts.push((s, w / scale));
                    }
                    s += 1;
                }
                parts
            })
            .collect()
    };
    let (ys, xs) = (spans(sh, th), spans(sw, tw));
    let mut out = Vec::with_capacity(th * tw * 3);
    for yspan in &ys {
        for xspan in &xs {
            let mut acc = [0.0; 3];
            for &(sy, wy) in yspan {
                for &(sx, wx) in xspan {
                    let base = (sy * sw + sx) * 3;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += wy * wx * rgb[base + c] as f64;
                    }
                }
            }
            out.extend(acc.iter().map(|v| v / 255.0));
        }
    }
    out
}

/// Decodes an image as RGB, resizes it to `extents` and scales to [0, 1].
pub fn load_image(path: &Path, extents: (usize, usize)) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = area_resize(img.as_raw(), (h as usize, w as usize), extents);
    Tensor::new([extents.0, extents.1, 3], data)
}

/// Quantizes a `[H, W, 3]` tensor in [0, 1] to an RGB8 PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape("save_png", format!("expected [H,W,3], got {:?}", image.shape())));
    };
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::shape("save_png", "buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Loads every record, normalizing herb names through `vocab`. Unknown names
/// across the whole manifest are reported together.
pub fn load_manifest(path: &Path, vocab: &HerbVocabulary, extents: (usize, usize)) -> Result<Dataset> {
    load_records(read_manifest(path)?, vocab, extents)
}

/// [`load_manifest`] over already parsed records.
pub fn load_records(records: Vec<ManifestRecord>, vocab: &HerbVocabulary, extents: (usize, usize)) -> Result<Dataset> {
    let mut unknown = BTreeSet::new();
    let mut herbs = Vec::with_capacity(records.len());
    for r in &records {
        match vocab.normalize(&r.herbs) {
            Ok(ids) => herbs.push(ids),
            Err(Error::UnknownHerbs(names)) => {
                unknown.extend(names);
                herbs.push(Vec::new());
            }
            Err(e) => return Err(e),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownHerbs(unknown.into_iter().collect()));
    }
    let samples = records
        .into_iter()
        .zip(herbs)
        .map(|(r, herbs)| {
            let image =
                load_image(&r.path, extents).map_err(|e| Error::Sample { id: r.id.clone(), reason: e.to_string() })?;
            Ok(Sample { id: r.id, image, herbs, topics: None })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, herb_count: vocab.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_resize_halves_by_averaging() {
        let rgb: Vec<u8> = [0u8, 255, 255, 0].iter().flat_map(|&v| [v, v, v]).collect();
        let out = area_resize(&rgb, (2, 2), (1, 1));
        assert_eq!(out, vec![0.5, 0.5, 0.5]);
        let same = area_resize(&rgb, (2, 2), (2, 2));
        assert_eq!(same[3], 1.0);
    }

    #[test]
    fn area_resize_uneven_ratio_preserves_mean() {
        let rgb: Vec<u8> = (0..5 * 7 * 3).map(|v| (v * 7 % 256) as u8).collect();
        let out = area_resize(&rgb, (5, 7), (3, 2));
        let mean_in = rgb.iter().map(|&v| v as f64).sum::<f64>() / rgb.len() as f64 / 255.0;
        let mean_out = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn manifest_round_trip_with_alias() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full([4, 4, 3], 0.2);
        save_png(&img, &dir.path().join("a.png")).unwrap();
        save_png(&img, &dir.path().join("b.png")).unwrap();
        let manifest = dir.path().join("m.tsv");
        fs::write(&manifest, "s1\ta.png\tGan Cao|Licorice|Fu Ling\ns2\tb.png\tFu Ling\n").unwrap();
        let vocab = crate::lda::build_vocabulary(
            &[vec!["Gan Cao".into(), "Fu Ling".into()]],
            &[("Licorice".into(), "Gan Cao".into())],
        )
        .unwrap();
        let ds = load_manifest(&manifest, &vocab, (2, 2)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].herbs, vec![0, 1]);
        assert_eq!(ds.samples[0].image.shape(), &[2, 2, 3]);
        assert!((ds.samples[0].image.data()[0] - 51.0 / 255.0).abs() < 1e-12);

        fs::write(&manifest, "s1\ta.png\tGan Cao|Zzz\ns2\tb.png\tYyy\n").unwrap();
        match load_manifest(&manifest, &vocab, (2, 2)) {
            Err(Error::UnknownHerbs(n)) => assert_eq!(n, ["Yyy", "Zzz"]),
            other => panic!("{other:?}"),
        }
        fs::write(&manifest, "s1\tmissing.png\tGan Cao\n").unwrap();
        assert!(matches!(load_manifest(&manifest, &vocab, (2, 2)), Err(Error::Sample { id, .. }) if id == "s1"));
    }

    #[test]
    fn manifest_rejects_duplicates_and_empty_lists() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "s1\ta.png\tx\ns1\tb.png\ty\n").unwrap();
        assert!(read_manifest(&m).is_err());
        fs::write(&m, "s1\ta.png\t | \n").unwrap();
        assert!(read_manifest(&m).is_err());
        fs::write(&m, "s1\ta.png\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::BadFormat(_))));
    }
}
