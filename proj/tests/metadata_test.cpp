#include <gtest/gtest.h>

#include <filesystem>

#include "dermfuse/metadata.hpp"
#include "dermfuse/serialize.hpp"
#include "testutil.hpp"

using namespace dermfuse;

namespace {

MetadataSchema test_schema() {
  MetadataSchema s;
  s.columns = {
      {"img_id", ColumnKind::identifier, {}, 0, 1},
      {"patient_id", ColumnKind::identifier, {}, 0, 1},
      {"gender", ColumnKind::categorical, {"MALE", "FEMALE"}, 0, 1},
      {"age", ColumnKind::numeric, {}, 0, 100},
      {"region", ColumnKind::categorical, {"ARM", "LEG", "FACE"}, 0, 1},
      {"diagnostic", ColumnKind::label, {"ACK", "BCC", "MEL", "NEV", "SCC", "SEK"}, 0, 1},
  };
  s.missing_markers = {"", "UNK"};
  s.sample_id_column = "img_id";
  s.patient_id_column = "patient_id";
  s.validate();
  return s;
}

std::string header() { return "img_id,patient_id,gender,age,region,diagnostic\n"; }

}  // namespace

TEST(SchemaJson, RoundTrip) {
  auto s = test_schema();
  auto j = s.to_json();
  auto back = MetadataSchema::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.encoded_length(), 2 + 1 + 3);
  EXPECT_EQ(back.n_classes(), 6);
}

TEST(SchemaJson, RejectsBadSchemas) {
  auto s = test_schema();
  s.columns[5].kind = ColumnKind::categorical;  // no label left
  EXPECT_THROW(s.validate(), SchemaError);

  auto s2 = test_schema();
  s2.columns[3].lo = 100;
  s2.columns[3].hi = 100;
  EXPECT_THROW(s2.validate(), SchemaError);

  auto s3 = test_schema();
  s3.sample_id_column = "gender";
  EXPECT_THROW(s3.validate(), SchemaError);
}

TEST(ParseCsv, CompleteRowHasNoMissingFields) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() + "i1,p1,MALE,50,ARM,ACK\n", schema);
  ASSERT_EQ(recs.size(), 1u);
  for (const auto& f : recs[0].fields) EXPECT_FALSE(f.empty());
  EXPECT_EQ(recs[0].label(schema), 0);
  EXPECT_EQ(recs[0].sample_id(schema), "i1");
  EXPECT_EQ(recs[0].patient_id(schema), "p1");
}

TEST(ParseCsv, EmptyAndConfiguredMarkersBecomeMissing) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() + "i1,p1,,UNK,ARM,BCC\n", schema);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_TRUE(recs[0].field(schema, "gender").empty());
  EXPECT_TRUE(recs[0].field(schema, "age").empty());
  EXPECT_EQ(recs[0].field(schema, "region"), "ARM");
}

TEST(ParseCsv, LabelOutsideVocabularyIsSchemaError) {
  auto schema = test_schema();
  EXPECT_THROW(parse_csv_text(header() + "i1,p1,MALE,50,ARM,WART\n", schema), SchemaError);
  EXPECT_THROW(parse_csv_text(header() + "i1,p1,MALE,50,ARM,\n", schema), SchemaError);
}

TEST(ParseCsv, MissingColumnNamesTheColumn) {
  auto schema = test_schema();
  try {
    parse_csv_text("img_id,patient_id,gender,age,diagnostic\ni,p,MALE,50,ACK\n", schema);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("region"), std::string::npos);
  }
}

TEST(ParseCsv, MalformedRowReportsLineNumber) {
  auto schema = test_schema();
  try {
    parse_csv_text(header() + "i1,p1,MALE,50,ARM,ACK\nbroken,row\n", schema);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(ParseCsv, HonorsRfc4180Quoting) {
  auto schema = test_schema();
  auto recs = parse_csv_text(
      "diagnostic,img_id,patient_id,gender,age,region\n"
      "MEL,\"id,with,commas\",\"pat \"\"quoted\"\"\",FEMALE,\"33\",\"AR\nM\"\n",
      schema);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].sample_id(schema), "id,with,commas");
  EXPECT_EQ(recs[0].patient_id(schema), "pat \"quoted\"");
  EXPECT_EQ(recs[0].field(schema, "age"), "33");
  // a quoted embedded newline is preserved; the value is outside the region
  // vocabulary so it later encodes as missing
  EXPECT_EQ(recs[0].field(schema, "region"), "AR\nM");
  EXPECT_EQ(recs[0].label(schema), 2);
}

TEST(Encode, OneHotNumericAndMask) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() + "i1,p1,MALE,50,LEG,ACK\n", schema);
  auto e = encode(recs[0], schema);
  ASSERT_EQ(e.values.size(), 6u);
  // gender [1,0], age 0.5, region [0,1,0]
  EXPECT_FLOAT_EQ(e.values[0], 1.0f);
  EXPECT_FLOAT_EQ(e.values[1], 0.0f);
  EXPECT_FLOAT_EQ(e.values[2], 0.5f);
  EXPECT_FLOAT_EQ(e.values[3], 0.0f);
  EXPECT_FLOAT_EQ(e.values[4], 1.0f);
  EXPECT_FLOAT_EQ(e.values[5], 0.0f);
  for (auto m : e.missing) EXPECT_EQ(m, 0);
}

TEST(Encode, MissingCategoricalGivesZeroGroupWithMask) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() + "i1,p1,UNK,50,ARM,ACK\n", schema);
  auto e = encode(recs[0], schema);
  EXPECT_FLOAT_EQ(e.values[0], 0.0f);
  EXPECT_FLOAT_EQ(e.values[1], 0.0f);
  EXPECT_EQ(e.missing[0], 1);
  EXPECT_EQ(e.missing[1], 1);
  EXPECT_EQ(e.missing[2], 0);
}

TEST(Encode, NumericBoundsClipAndParseErrors) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() + "i1,p1,MALE,250,ARM,ACK\n", schema);
  EXPECT_FLOAT_EQ(encode(recs[0], schema).values[2], 1.0f);

  auto bad = parse_csv_text(header() + "i1,p1,MALE,not_a_number,ARM,ACK\n", schema);
  EXPECT_THROW(encode(bad[0], schema), ParseError);
}

TEST(Encode, InjectiveOnDifferingRecords) {
  auto schema = test_schema();
  Rng rng(4);
  const char* genders[] = {"MALE", "FEMALE", "UNK"};
  const char* regions[] = {"ARM", "LEG", "FACE", "UNK"};
  std::vector<MetadataRecord> recs;
  std::vector<EncodedMeta> encs;
  for (int i = 0; i < 60; ++i) {
    std::string row = "i" + std::to_string(i) + ",p,";
    row += genders[rng.below(3)];
    row += ",";
    row += std::to_string(rng.below(100));
    row += ",";
    row += regions[rng.below(4)];
    row += ",ACK\n";
    auto r = parse_csv_text(header() + row, schema);
    recs.push_back(r[0]);
    encs.push_back(encode(r[0], schema));
  }
  for (std::size_t i = 0; i < recs.size(); ++i) {
    for (std::size_t j = i + 1; j < recs.size(); ++j) {
      bool differ = false;  // in any non-identifier column
      for (std::size_t c = 2; c < recs[i].fields.size(); ++c) {
        differ |= recs[i].fields[c] != recs[j].fields[c];
      }
      if (differ) {
        EXPECT_TRUE(encs[i].values != encs[j].values || encs[i].missing != encs[j].missing);
      }
    }
  }
}

TEST(Impute, NoMissingValuesIsIdentityInBothModes) {
  auto schema = test_schema();
  std::string csv = header();
  for (int i = 0; i < 8; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i) + ",MALE," + std::to_string(20 + i) +
           ",ARM,ACK\n";
  }
  auto recs = parse_csv_text(csv, schema);
  std::vector<EncodedMeta> encs;
  for (const auto& r : recs) encs.push_back(encode(r, schema));
  std::vector<std::size_t> train_idx = {0, 1, 2, 3, 4, 5};
  for (auto mode : {ImputeMode::statistic, ImputeMode::autoencoder}) {
    auto out = impute(encs, mode, schema, train_idx, 0);
    for (std::size_t i = 0; i < encs.size(); ++i) EXPECT_EQ(out[i].values, encs[i].values);
  }
}

TEST(Impute, StatisticModeUsesModeAndMedian) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() +
                                 "i0,p0,MALE,10,ARM,ACK\n"
                                 "i1,p1,MALE,30,ARM,ACK\n"
                                 "i2,p2,FEMALE,20,LEG,ACK\n"
                                 "i3,p3,UNK,UNK,UNK,ACK\n",
                             schema);
  std::vector<EncodedMeta> encs;
  for (const auto& r : recs) encs.push_back(encode(r, schema));
  Imputer imp;
  auto out = impute(encs, ImputeMode::statistic, schema, {0, 1, 2}, 0, &imp);
  // mode gender = MALE, median age = 20/100, mode region = ARM
  EXPECT_FLOAT_EQ(out[3].values[0], 1.0f);
  EXPECT_FLOAT_EQ(out[3].values[1], 0.0f);
  EXPECT_FLOAT_EQ(out[3].values[2], 0.2f);
  EXPECT_FLOAT_EQ(out[3].values[3], 1.0f);
  // mask still marks the originally missing entries
  EXPECT_EQ(out[3].missing[0], 1);

  // serialized statistics restore to the same behavior
  auto j = imp.stats().to_json();
  Imputer restored;
  restored.restore(ImputerStats::from_json(j));
  auto again = restored.apply(schema, encs[3]);
  EXPECT_EQ(again.values, out[3].values);
}

TEST(Impute, OneHotGroupsSumToOneAfterImputation) {
  auto schema = test_schema();
  Rng rng(9);
  std::string csv = header();
  const char* genders[] = {"MALE", "FEMALE", "UNK"};
  const char* regions[] = {"ARM", "LEG", "FACE", "UNK"};
  for (int i = 0; i < 40; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i) + "," + genders[rng.below(3)] + "," +
           (rng.bernoulli(0.3) ? std::string("UNK") : std::to_string(rng.below(90))) + "," +
           regions[rng.below(4)] + ",MEL\n";
  }
  auto recs = parse_csv_text(csv, schema);
  std::vector<EncodedMeta> encs;
  for (const auto& r : recs) encs.push_back(encode(r, schema));
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < 30; ++i) train_idx.push_back(i);
  for (auto mode : {ImputeMode::statistic, ImputeMode::autoencoder}) {
    auto out = impute(encs, mode, schema, train_idx, 7);
    for (std::size_t i = 0; i < out.size(); ++i) {
      float gender_sum = out[i].values[0] + out[i].values[1];
      float region_sum = out[i].values[3] + out[i].values[4] + out[i].values[5];
      EXPECT_FLOAT_EQ(gender_sum, 1.0f);
      EXPECT_FLOAT_EQ(region_sum, 1.0f);
      EXPECT_GE(out[i].values[2], 0.0f);
      EXPECT_LE(out[i].values[2], 1.0f);
      // observed entries unchanged
      for (std::size_t k = 0; k < out[i].values.size(); ++k) {
        if (!encs[i].missing[k]) {
          EXPECT_FLOAT_EQ(out[i].values[k], encs[i].values[k]);
        }
      }
    }
  }
}

TEST(Impute, EmptyTrainingPartitionIsStateError) {
  auto schema = test_schema();
  auto recs = parse_csv_text(header() + "i0,p0,MALE,10,ARM,ACK\n", schema);
  std::vector<EncodedMeta> encs{encode(recs[0], schema)};
  EXPECT_THROW(impute(encs, ImputeMode::statistic, schema, {}, 0), StateError);
}

TEST(Split, ExactRatiosForSingletonPatients) {
  auto schema = test_schema();
  std::string csv = header();
  for (int i = 0; i < 10; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i) + ",MALE,50,ARM,ACK\n";
  }
  auto recs = parse_csv_text(csv, schema);
  auto sa = split(recs, schema, {0.8, 0.1, 0.1}, 42);
  auto counts = sa.counts();
  EXPECT_EQ(counts[0], 8u);
  EXPECT_EQ(counts[1], 1u);
  EXPECT_EQ(counts[2], 1u);
}

TEST(Split, PatientGroupIntegrity) {
  auto schema = test_schema();
  std::string csv = header();
  for (int i = 0; i < 9; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i / 3) + ",MALE,50,ARM,ACK\n";
  }
  auto recs = parse_csv_text(csv, schema);
  auto sa = split(recs, schema, {0.8, 0.1, 0.1}, 1);
  for (int p = 0; p < 3; ++p) {
    auto part = sa.of("i" + std::to_string(p * 3));
    EXPECT_EQ(sa.of("i" + std::to_string(p * 3 + 1)), part);
    EXPECT_EQ(sa.of("i" + std::to_string(p * 3 + 2)), part);
  }
}

TEST(Split, DeterministicAndExhaustive) {
  auto schema = test_schema();
  std::string csv = header();
  for (int i = 0; i < 57; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i % 19) + ",MALE,50,ARM,ACK\n";
  }
  auto recs = parse_csv_text(csv, schema);
  auto a = split(recs, schema, {0.8, 0.1, 0.1}, 123);
  auto b = split(recs, schema, {0.8, 0.1, 0.1}, 123);
  EXPECT_EQ(a.by_sample, b.by_sample);
  auto c = a.counts();
  EXPECT_EQ(c[0] + c[1] + c[2], 57u);  // partitions are disjoint by map, exhaustive by count
  EXPECT_THROW(split(recs, schema, {0.5, 0.5, 0.5}, 0), ContractError);
}

TEST(Split, SplitFileIsVerbatimAndValidated) {
  auto schema = test_schema();
  testutil::TempDir dir("split");
  std::string csv = header();
  for (int i = 0; i < 4; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i) + ",MALE,50,ARM,ACK\n";
  }
  auto recs = parse_csv_text(csv, schema);

  auto file = dir.path() / "split.csv";
  write_file_text(file, "sample_id,partition\ni0,test\ni1,val\ni2,train\ni3,train\n");
  auto sa = split(recs, schema, {0.8, 0.1, 0.1}, 0, true, file);
  EXPECT_EQ(sa.of("i0"), Partition::test);
  EXPECT_EQ(sa.of("i1"), Partition::val);
  EXPECT_EQ(sa.of("i2"), Partition::train);

  write_file_text(file, "sample_id,partition\ni0,test\nghost,val\n");
  EXPECT_THROW(split(recs, schema, {0.8, 0.1, 0.1}, 0, true, file), SchemaError);

  write_file_text(file, "sample_id,partition\ni0,test\n");  // does not cover i1..i3
  EXPECT_THROW(split(recs, schema, {0.8, 0.1, 0.1}, 0, true, file), SchemaError);
}

TEST(EncodedCache, RoundTripAndVersionGuard) {
  auto schema = test_schema();
  testutil::TempDir dir("cache");
  std::string csv = header();
  for (int i = 0; i < 5; ++i) {
    csv += "i" + std::to_string(i) + ",p" + std::to_string(i) + ",FEMALE," + std::to_string(i * 10) +
           ",FACE,SEK\n";
  }
  auto recs = parse_csv_text(csv, schema);
  EncodedDataset ds;
  for (const auto& r : recs) {
    ds.sample_ids.push_back(r.sample_id(schema));
    ds.patient_ids.push_back(r.patient_id(schema));
    ds.labels.push_back(r.label(schema));
    ds.encoded.push_back(encode(r, schema));
  }
  auto path = dir.path() / "cache.bin";
  save_encoded_cache(ds, path);
  auto back = load_encoded_cache(path);
  EXPECT_EQ(back.sample_ids, ds.sample_ids);
  EXPECT_EQ(back.labels, ds.labels);
  for (std::size_t i = 0; i < ds.encoded.size(); ++i) {
    EXPECT_EQ(back.encoded[i].values, ds.encoded[i].values);
    EXPECT_EQ(back.encoded[i].missing, ds.encoded[i].missing);
  }

  auto bytes = read_file_bytes(path);
  bytes[0] = 'X';
  write_file_bytes(path, bytes);
  EXPECT_THROW(load_encoded_cache(path), VersionError);
}
