#pragma once

// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 COIECD Authors

/// @file dataset.hpp
/// @brief QA item ingestion from JSONL and SQuAD-dev JSON.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "coiecd/errors.hpp"

namespace coiecd::eval {

enum class TaskType : std::uint8_t { extractive, boolean_answer };

struct QAItem {
  std::string id;
  std::string question;
  std::string context;
  std::vector<std::string> gold_answers;
  TaskType task_type = TaskType::extractive;
};

enum class DatasetFormat : std::uint8_t { jsonl, squad };

namespace detail {

inline void validate_item(const QAItem& item, const std::string& where) {
  if (item.gold_answers.empty()) {
    throw IngestError(where + ": empty answers for item '" + item.id + "'");
  }
}

inline std::vector<QAItem> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open dataset " + path);
  std::vector<QAItem> items;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IngestError(where + ": invalid JSON: " + e.what());
    }
    for (const char* key : {"id", "question", "context", "answers"}) {
      if (!j.contains(key)) throw IngestError(where + ": missing key '" + std::string(key) + "'");
    }
    QAItem item;
    try {
      item.id = j.at("id").get<std::string>();
      item.question = j.at("question").get<std::string>();
      item.context = j.at("context").get<std::string>();
      item.gold_answers = j.at("answers").get<std::vector<std::string>>();
      const std::string type = j.value("type", std::string("extractive"));
      if (type == "boolean") {
        item.task_type = TaskType::boolean_answer;
      } else if (type == "extractive") {
        item.task_type = TaskType::extractive;
      } else {
        throw IngestError(where + ": unknown type '" + type + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw IngestError(where + ": bad field type: " + e.what());
    }
    validate_item(item, where);
    if (!seen.insert(item.id).second) {
      throw IngestError(where + ": duplicate id '" + item.id + "'");
    }
    items.push_back(std::move(item));
  }
  return items;
}

inline std::vector<QAItem> load_squad(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open dataset " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestError(std::string("invalid SQuAD JSON: ") + e.what());
  }
  std::vector<QAItem> items;
  std::set<std::string> seen;
  try {
    for (const auto& article : j.at("data")) {
      for (const auto& paragraph : article.at("paragraphs")) {
        const std::string context = paragraph.at("context").get<std::string>();
        for (const auto& qa : paragraph.at("qas")) {
          QAItem item;
          item.id = qa.at("id").get<std::string>();
          item.question = qa.at("question").get<std::string>();
          item.context = context;
          // Deduplicate references, preserving first-seen order.
          for (const auto& ans : qa.at("answers")) {
            const std::string text = ans.at("text").get<std::string>();
            if (std::find(item.gold_answers.begin(), item.gold_answers.end(), text) ==
                item.gold_answers.end()) {
              item.gold_answers.push_back(text);
            }
          }
          validate_item(item, "item '" + item.id + "'");
          if (!seen.insert(item.id).second) {
            throw IngestError("duplicate id '" + item.id + "'");
          }
          items.push_back(std::move(item));
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IngestError(std::string("malformed SQuAD structure: ") + e.what());
  }
  return items;
}

}  // namespace detail

/// Loads and validates a dataset; rejects duplicate ids and empty answer lists.
inline std::vector<QAItem> load_dataset(const std::string& path,
                                        DatasetFormat format = DatasetFormat::jsonl) {
  return format == DatasetFormat::jsonl ? detail::load_jsonl(path) : detail::load_squad(path);
}

}  // namespace coiecd::eval
