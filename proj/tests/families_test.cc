#include "peopl/families.hpp"

#include <map>

#include "exact_oracle.hpp"
#include "gtest/gtest.h"
#include "peopl/error.hpp"

namespace peopl {
namespace {

Universe FourSampleUniverse() {
  return scalar_universe({1, 2, 3, 4}, {"+", "+", "-", "-"});
}

using Table = std::vector<Symbol>;

std::map<Table, double> AsDistribution(const EncoderFamily& f) {
  std::map<Table, double> out;
  for (std::size_t i = 0; i < f.size(); ++i) {
    out[f.encoder(i).mapping()] += f.weight(i);
  }
  return out;
}

void ExpectSameDistribution(const EncoderFamily& a, const EncoderFamily& b,
                            double tol) {
  const auto da = AsDistribution(a);
  const auto db = AsDistribution(b);
  ASSERT_EQ(da.size(), db.size());
  for (const auto& [table, w] : da) {
    ASSERT_TRUE(db.count(table));
    EXPECT_NEAR(w, db.at(table), tol);
  }
}

TEST(FamilyTest, MakeFamilyValidates) {
  const Universe u = FourSampleUniverse();
  const EncoderFamily f = uniform_family(
      u, {TableEncoder({1, 2, 3, 4}), TableEncoder({2, 1, 3, 4})});
  EXPECT_EQ(f.size(), 2u);
  EXPECT_EQ(uniform_family(u, {identity_encoder(u)}).size(), 1u);
  EXPECT_THROW(make_family(u, {TableEncoder({1, 2, 3, 4}),
                               TableEncoder({2, 1, 3, 4})},
                           {0.6, 0.6}),
               InvalidArgument);
  EXPECT_THROW(TableEncoder({1, 1, 3, 4}), InvalidArgument);
  EXPECT_THROW(uniform_family(u, {TableEncoder({1, 2, 3, 4}),
                                  TableEncoder({1, 2, 3, 4})}),
               InvalidArgument);
  EXPECT_THROW(make_family(u, {TableEncoder({1, 2, 3, 4})}, {0.0}),
               InvalidArgument);
}

TEST(FamilyTest, SamplingFrequencies) {
  const Universe u = FourSampleUniverse();
  const EncoderFamily single = uniform_family(u, {identity_encoder(u)});
  EXPECT_EQ(sample_encoder(single, 1), identity_encoder(u));
  EXPECT_EQ(sample_encoder(single, 12345), identity_encoder(u));

  const EncoderFamily uniform = uniform_family(
      u, {TableEncoder({1, 2, 3, 4}), TableEncoder({2, 1, 3, 4})});
  const EncoderFamily skewed = make_family(
      u, {TableEncoder({1, 2, 3, 4}), TableEncoder({2, 1, 3, 4})}, {0.9, 0.1});
  int uniform_first = 0;
  int skewed_first = 0;
  constexpr int kSeeds = 10000;
  for (int s = 0; s < kSeeds; ++s) {
    uniform_first += sample_encoder_index(uniform, s) == 0;
    skewed_first += sample_encoder_index(skewed, s) == 0;
  }
  EXPECT_NEAR(uniform_first / double{kSeeds}, 0.5, 0.02);
  EXPECT_NEAR(skewed_first / double{kSeeds}, 0.9, 0.02);
}

TEST(FamilyTest, ComposeSwapFamilies) {
  const Universe u = FourSampleUniverse();
  const EncoderFamily f = uniform_family(
      u, {TableEncoder({1, 2, 3, 4}), TableEncoder({2, 1, 3, 4})});
  const EncoderFamily g = uniform_family(
      u, {TableEncoder({1, 2, 3, 4}), TableEncoder({1, 2, 4, 3})});
  const EncoderFamily composed = compose_families(f, g);
  ASSERT_EQ(composed.size(), 4u);
  const std::vector<Table> expected{
      {1, 2, 3, 4}, {2, 1, 3, 4}, {1, 2, 4, 3}, {2, 1, 4, 3}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(composed.encoder(i).mapping(), expected[i]);
    EXPECT_DOUBLE_EQ(composed.weight(i), 0.25);
  }
}

TEST(FamilyTest, ComposeMergesIdenticalComposites) {
  const Universe u = FourSampleUniverse();
  const EncoderFamily swap = uniform_family(
      u, {TableEncoder({1, 2, 3, 4}), TableEncoder({2, 1, 3, 4})});
  // id.id = swap.swap = id; id.swap = swap.id = swap.
  const EncoderFamily composed = compose_families(swap, swap);
  ASSERT_EQ(composed.size(), 2u);
  EXPECT_EQ(composed.encoder(0).mapping(), (Table{1, 2, 3, 4}));
  EXPECT_DOUBLE_EQ(composed.weight(0), 0.5);
  EXPECT_DOUBLE_EQ(composed.weight(1), 0.5);
}

TEST(FamilyTest, ComposeRejectsCodomainOutsideDomain) {
  const Universe u = FourSampleUniverse();
  const EncoderFamily f = uniform_family(u, {TableEncoder({5, 6, 7, 8})});
  EXPECT_THROW(compose_families(f, f), InvalidArgument);
}

TEST(FamilyTest, IdentityAndAssociativityProperties) {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t size = 2 + rng.below(4);
    const Universe u = oracle::random_universe(size, 2, rng);
    const EncoderFamily a = oracle::random_family(u, 4, rng);
    const EncoderFamily b = oracle::random_family(u, 4, rng);
    const EncoderFamily c = oracle::random_family(u, 4, rng);
    const EncoderFamily id = uniform_family(u, {identity_encoder(u)});

    EXPECT_EQ(compose_families(a, id), a);
    EXPECT_EQ(compose_families(id, a), a);

    const EncoderFamily ab = compose_families(a, b);
    EXPECT_LE(ab.size(), a.size() * b.size());
    double total = 0;
    for (double w : ab.weights()) total += w;
    EXPECT_NEAR(total, 1.0, 1e-12);

    ExpectSameDistribution(compose_families(compose_families(a, b), c),
                           compose_families(a, compose_families(b, c)), 1e-12);
  }
}

TEST(FamilyTest, GrowFamily) {
  const Universe u = FourSampleUniverse();
  const EncoderFamily f = permutation_family(u, PermutationKind::kLabelPreserving);
  const EncoderFamily grown =
      grow_family(f, {TableEncoder({3, 4, 1, 2})}, std::vector<double>(5, 0.2));
  ASSERT_EQ(grown.size(), 5u);
  EXPECT_EQ(grown.encoder(4).mapping(), (Table{3, 4, 1, 2}));

  EXPECT_EQ(grow_family(f, {}, f.weights()), f);

  const EncoderFamily id = uniform_family(u, {identity_encoder(u)});
  const EncoderFamily two =
      grow_family(id, {TableEncoder({2, 1, 3, 4})}, {0.5, 0.5});
  EXPECT_EQ(two.size(), 2u);
  EXPECT_THROW(grow_family(id, {identity_encoder(u)}, {0.5, 0.5}),
               InvalidArgument);
}

TEST(FamilyTest, PermutationFamilies) {
  const EncoderFamily all3 = permutation_family(
      scalar_universe({1, 2, 3}, {"a", "b", "a"}), PermutationKind::kAll);
  EXPECT_EQ(all3.size(), 6u);
  for (double w : all3.weights()) EXPECT_DOUBLE_EQ(w, 1.0 / 6.0);

  const EncoderFamily preserving = permutation_family(
      FourSampleUniverse(), PermutationKind::kLabelPreserving);
  ASSERT_EQ(preserving.size(), 4u);
  const std::vector<Table> expected{
      {1, 2, 3, 4}, {1, 2, 4, 3}, {2, 1, 3, 4}, {2, 1, 4, 3}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(preserving.encoder(i).mapping(), expected[i]);
  }

  const EncoderFamily one =
      permutation_family(scalar_universe({7}, {"a"}), PermutationKind::kAll);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.encoder(0).mapping(), (Table{7}));

  std::vector<SampleId> nine{1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_THROW(permutation_family(
                   scalar_universe(nine, std::vector<std::string>(9, "a")),
                   PermutationKind::kAll),
               InvalidArgument);
}

}  // namespace
}  // namespace peopl
