use super::ImagePair;
use crate::{Error, Result};

fn crop(src: &[u8], width: usize, channels: usize, y0: usize, x0: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w * channels);
    for y in y0..y0 + h {
        let start = (y * width + x0) * channels;
        out.extend_from_slice(&src[start..start + w * channels]);
    }
    out
}

/// Cut a pair into non-overlapping `tile x tile` pieces in row-major order.
/// Tile ids are `<id>_r<row>_c<col>`.
pub fn tile_pair(pair: &ImagePair, tile: usize) -> Result<Vec<ImagePair>> {
    if tile == 0 || pair.height % tile != 0 || pair.width % tile != 0 {
        return Err(Error::Input(format!(
            "pair `{}` is {}x{}, not divisible into {tile}x{tile} tiles",
            pair.id, pair.height, pair.width
        )));
    }
    let (rows, cols) = (pair.height / tile, pair.width / tile);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y0, x0) = (r * tile, c * tile);
            tiles.push(ImagePair {
                id: format!("{}_r{r}_c{c}", pair.id),
                height: tile,
                width: tile,
                t1: crop(&pair.t1, pair.width, 3, y0, x0, tile, tile),
                t2: crop(&pair.t2, pair.width, 3, y0, x0, tile, tile),
                label: crop(&pair.label, pair.width, 1, y0, x0, tile, tile),
            });
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile_pair`] for a `rows x cols` grid of equal tiles.
pub fn detile(tiles: &[ImagePair], rows: usize, cols: usize, id: &str) -> Result<ImagePair> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::Input(format!("{} tiles cannot fill a {rows}x{cols} grid", tiles.len())));
    }
    let (th, tw) = (tiles[0].height, tiles[0].width);
    if tiles.iter().any(|t| t.height != th || t.width != tw) {
        return Err(Error::Input("tiles differ in size".into()));
    }
    let (h, w) = (rows * th, cols * tw);
    let mut t1 = vec![0; h * w * 3];
    let mut t2 = vec![0; h * w * 3];
    let mut label = vec![0; h * w];
    for (i, t) in tiles.iter().enumerate() {
        let (y0, x0) = ((i / cols) * th, (i % cols) * tw);
        for y in 0..th {
            let dst = ((y0 + y) * w + x0) * 3;
            let src = y * tw * 3;
            t1[dst..dst + tw * 3].copy_from_slice(&t.t1[src..src + tw * 3]);
            t2[dst..dst + tw * 3].copy_from_slice(&t.t2[src..src + tw * 3]);
            let dl = (y0 + y) * w + x0;
            label[dl..dl + tw].copy_from_slice(&t.label[y * tw..(y + 1) * tw]);
        }
    }
    ImagePair::new(id, h, w, t1, t2, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    #[test]
    fn counts_and_identity() {
        let p = synthetic::coordinate_pair("p", 512, 512);
        assert_eq!(tile_pair(&p, 256).unwrap().len(), 4);
        let q = synthetic::coordinate_pair("q", 256, 256);
        let one = tile_pair(&q, 256).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((&one[0].t1, &one[0].t2, &one[0].label), (&q.t1, &q.t2, &q.label));
    }

    #[test]
    fn non_divisible_names_pair() {
        let p = synthetic::coordinate_pair("odd_one", 300, 256);
        match tile_pair(&p, 256) {
            Err(Error::Input(msg)) => assert!(msg.contains("odd_one")),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_non_square() {
        let p = synthetic::coordinate_pair("r", 96, 160);
        let tiles = tile_pair(&p, 32).unwrap();
        assert_eq!(tiles[1].id, "r_r0_c1");
        assert_eq!(detile(&tiles, 3, 5, "r").unwrap(), p);
    }
}
