// Emits synthetic interaction logs in the generic TSV format, handy for
// exercising the pipeline without a real dataset.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "parec/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic interaction-log generator"};
  std::string kind = "cyclic", out;
  int items = 50, users = 500, len = 30, lag = 3, step = 1;
  std::uint64_t seed = 1;
  app.add_option("--kind", kind, "cyclic | lagged");
  app.add_option("--items", items, "item vocabulary size");
  app.add_option("--users", users, "number of users");
  app.add_option("--len", len, "interactions per user");
  app.add_option("--lag", lag, "dependence distance (lagged)");
  app.add_option("--step", step, "item increment (lagged)");
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--out", out, "output TSV path")->required();
  CLI11_PARSE(app, argc, argv);

  try {
    parec::InteractionDataset ds =
        kind == "lagged" ? parec::make_lagged_dataset(items, users, len, lag, step, seed)
                         : parec::make_cyclic_dataset(items, users, len, seed);
    parec::write_interactions_tsv(parec::dataset_to_raw(ds), out);
    std::cout << "wrote " << out << " (" << ds.num_users << " users, " << ds.num_items
              << " items)\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
