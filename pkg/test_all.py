import os
import pytest
import utils
import constants
import config_utils
import data_frame_utils
import data_model
import task_builder
import encoder
import objectives
import trainer
import retrieval_eval
import synthetic_corpus
import experiments
import main

# each module keeps its own tests; these wrappers let a pytest runner collect them too

def test_utils():
    utils.tests()

def test_constants():
    constants.tests()

def test_config_utils():
    config_utils.tests()

def test_data_frame_utils():
    data_frame_utils.tests()

def test_data_model():
    data_model.tests()

def test_task_builder():
    task_builder.tests()

def test_encoder():
    encoder.tests()

def test_objectives():
    objectives.tests()

def test_trainer():
    trainer.tests()

def test_retrieval_eval():
    retrieval_eval.tests()

def test_synthetic_corpus():
    synthetic_corpus.tests()

def test_experiments():
    experiments.test_settings()
    experiments.test_run_variant()
    experiments.test_compare_and_sweep()

desk_scale = pytest.mark.skipif(not constants.SSP_SLOW_TESTS, reason="desk-scale run of several CPU minutes; set SSP_SLOW_TESTS=true")

@desk_scale
def test_head_quality_desk_scale():
    experiments.test_head_quality_desk_scale()

@desk_scale
def test_ssp_not_worse_desk_scale():
    experiments.test_ssp_not_worse_desk_scale()

@desk_scale
def test_robustness_desk_scale():
    experiments.test_robustness_desk_scale()

def test_main():
    main.tests()

def tests():
    test_utils()
    test_constants()
    test_config_utils()
    test_data_frame_utils()
    test_data_model()
    test_task_builder()
    test_encoder()
    test_objectives()
    test_trainer()
    test_retrieval_eval()
    test_synthetic_corpus()
    test_experiments()
    test_main()
    if constants.SSP_SLOW_TESTS:
        test_head_quality_desk_scale()
        test_ssp_not_worse_desk_scale()
        test_robustness_desk_scale()
    else:
        print("skipped desk-scale tests; set SSP_SLOW_TESTS=true to run them")
    print("all tests passed in", os.path.basename(__file__))

if __name__ == "__main__":
    tests()
