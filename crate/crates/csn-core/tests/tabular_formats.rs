//! The built-in fairness schemas against miniature files in the published
//! formats: space-separated category codes for the credit data, padded
//! comma-separated fields with "?" markers for the census data.

use std::io::Write;

use csn_core::datasets::{adult_schema, german_schema, load_tabular, Split};

#[test]
fn german_format_parses_and_derives_age_label() {
    let rows = [
        "A11 6 A34 A43 1169 A65 A75 4 A93 A101 4 A121 67 A143 A152 2 A173 1 A192 A201 1",
        "A12 48 A32 A43 5951 A61 A73 2 A92 A101 2 A121 22 A143 A152 1 A173 1 A191 A201 2",
        "A14 12 A34 A46 2096 A61 A74 2 A93 A101 3 A121 49 A143 A152 1 A172 2 A191 A201 1",
        "A11 42 A32 A42 7882 A61 A74 2 A93 A103 4 A122 45 A143 A153 1 A173 2 A191 A201 1",
        "A11 24 A33 A40 4870 A61 A73 3 A93 A101 4 A124 53 A143 A154 2 A173 2 A191 A201 2",
        "A14 36 A32 A46 9055 A65 A73 2 A93 A101 4 A124 35 A143 A153 1 A172 2 A192 A201 1",
        "A14 24 A32 A42 2835 A63 A75 3 A93 A101 4 A122 53 A143 A152 1 A173 1 A191 A201 1",
        "A12 36 A32 A41 6948 A61 A73 2 A93 A101 2 A123 35 A143 A151 1 A174 1 A192 A201 1",
        "A14 12 A32 A43 3059 A64 A74 2 A91 A101 4 A121 61 A143 A152 1 A172 1 A191 A201 1",
        "A12 30 A34 A40 5234 A61 A71 4 A94 A101 2 A123 28 A143 A152 2 A174 1 A191 A201 2",
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("german.data");
    let mut f = std::fs::File::create(&path).unwrap();
    for r in rows {
        writeln!(f, "{r}").unwrap();
    }
    let ds = load_tabular(&path, &german_schema(), 0).unwrap();
    assert_eq!(ds.len(), 10);
    // Ages: 67,22,49,45,53,35,53,35,61,28 → older-than-25 labels.
    assert_eq!(ds.labels[1], vec![1, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
    // Target 1 = good credit = positive class.
    assert_eq!(ds.labels[0], vec![1, 0, 1, 1, 0, 1, 1, 1, 1, 0]);
    // 13 categorical columns expand; 6 continuous stay single.
    assert!(ds.num_features() > 20);
    let train = ds.indices(Split::Train).len();
    let val = ds.indices(Split::Val).len();
    let test = ds.indices(Split::Test).len();
    assert_eq!((train, val, test), (7, 1, 2));
}

#[test]
fn adult_format_handles_padding_missing_and_trailing_period() {
    let rows = [
        "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K",
        "50, Self-emp-not-inc, 83311, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 13, United-States, <=50K",
        "38, Private, 215646, HS-grad, 9, Divorced, Handlers-cleaners, Not-in-family, White, Male, 0, 0, 40, United-States, <=50K",
        "53, Private, 234721, 11th, 7, Married-civ-spouse, Handlers-cleaners, Husband, Black, Male, 0, 0, 40, United-States, <=50K",
        "28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, <=50K",
        "37, Private, 284582, Masters, 14, Married-civ-spouse, Exec-managerial, Wife, White, Female, 0, 0, 40, United-States, >50K.",
        "49, Private, 160187, 9th, 5, Married-spouse-absent, Other-service, Not-in-family, Black, Female, 0, 0, 16, Jamaica, <=50K",
        "52, Self-emp-not-inc, 209642, HS-grad, 9, Married-civ-spouse, Exec-managerial, Husband, White, Male, 0, 0, 45, United-States, >50K",
        "31, ?, 45781, Masters, 14, Never-married, Prof-specialty, Not-in-family, White, Female, 14084, 0, 50, United-States, >50K",
        "42, Private, 159449, Bachelors, 13, Married-civ-spouse, Exec-managerial, Husband, White, Male, 5178, 0, 40, United-States, >50K",
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adult.data");
    let mut f = std::fs::File::create(&path).unwrap();
    for r in rows {
        writeln!(f, "{r}").unwrap();
    }
    let ds = load_tabular(&path, &adult_schema(), 1).unwrap();
    assert_eq!(ds.len(), 10);
    // Sex = Male is the protected rule.
    assert_eq!(ds.labels[1], vec![1, 1, 1, 1, 0, 0, 0, 1, 0, 1]);
    // ">50K." (test-file convention) counts as positive too.
    assert_eq!(ds.labels[0], vec![0, 0, 0, 0, 0, 1, 0, 1, 1, 1]);
    // "?" workclass became a category, not an error.
    assert!(ds.feature_names.iter().any(|n| n == "workclass=?"));
}
