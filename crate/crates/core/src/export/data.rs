//! Input-vector CSV files: header `x0,…,x{d−1}` with an optional trailing
//! `label` column.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn write_samples(w: impl Write, s: &Samples) -> Result<()> {
    let d = s.x.first().map_or(0, Vec::len);
    if s.x.iter().any(|x| x.len() != d) || s.labels.as_ref().is_some_and(|y| y.len() != s.x.len()) {
        return Err(Error::dims("ragged samples"));
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if s.labels.is_some() {
        header.push("label".into());
    }
    wr.write_record(&header)?;
    for (i, x) in s.x.iter().enumerate() {
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        if let Some(y) = &s.labels {
            rec.push(y[i].to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_samples(r: impl Read) -> Result<Samples> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let labelled = header.iter().last() == Some("label");
    let d = header.len() - labelled as usize;
    if d == 0 || header.iter().take(d).enumerate().any(|(i, h)| h != format!("x{i}")) {
        return Err(Error::Format("sample header must be x0,…,x{d-1}[,label]".into()));
    }
    let mut x = Vec::new();
    let mut labels = labelled.then(Vec::new);
    for rec in rd.records() {
        let rec = rec?;
        let row = (0..d)
            .map(|i| rec[i].trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number {:?}", &rec[i]))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(y) = labels.as_mut() {
            y.push(rec[d].trim().parse().map_err(|_| Error::Format(format!("bad label {:?}", &rec[d])))?);
        }
        x.push(row);
    }
    if x.is_empty() {
        return Err(Error::Format("no samples".into()));
    }
    Ok(Samples { x, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let s = Samples { x: vec![vec![0.1, -2.5], vec![1.0 / 3.0, 4e-12]], labels: Some(vec![1, 0]) };
        let mut buf = Vec::new();
        write_samples(&mut buf, &s).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), s);
        let unlabelled = Samples { labels: None, ..s };
        let mut buf = Vec::new();
        write_samples(&mut buf, &unlabelled).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), unlabelled);
    }
}
